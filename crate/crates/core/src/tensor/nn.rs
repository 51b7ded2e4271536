use rand::Rng;

use super::Tensor;
use crate::error::{Error, Result};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Tensor {
    /// Softmax over the last dimension, stabilised by subtracting each
    /// row's maximum.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        if !self.is_finite() {
            return Err(Error::NonFinite("softmax_rows input".into()));
        }
        let n = *self
            .shape()
            .last()
            .ok_or_else(|| Error::InvalidArgument("softmax_rows on a scalar".into()))?;
        let mut out = self.data().to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        Ok(Tensor::from_op(
            "softmax_rows",
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            move |y, g| {
                let mut gx = vec![0.0; y.len()];
                for ((yr, gr), out) in y.chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        out[j] = yr[j] * (gr[j] - dot);
                    }
                }
                vec![Some(gx)]
            },
        ))
    }

    /// Layer normalisation over the last dimension followed by the affine
    /// map `gain * x̂ + bias`.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        let d = *self
            .shape()
            .last()
            .ok_or_else(|| Error::InvalidArgument("layer_norm on a scalar".into()))?;
        if gain.shape() != [d] {
            return Err(Error::shape("layer_norm", self.shape(), gain.shape()));
        }
        if bias.shape() != [d] {
            return Err(Error::shape("layer_norm", self.shape(), bias.shape()));
        }
        let rows = self.numel() / d;
        let mut xhat = vec![0.0; self.numel()];
        let mut rstd = vec![0.0; rows];
        for (r, (src, dst)) in self.data().chunks(d).zip(xhat.chunks_mut(d)).enumerate() {
            let mean = src.iter().sum::<f64>() / d as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            rstd[r] = inv;
            for (o, v) in dst.iter_mut().zip(src) {
                *o = (v - mean) * inv;
            }
        }
        let mut out = xhat.clone();
        for row in out.chunks_mut(d) {
            for j in 0..d {
                row[j] = row[j] * gain.data()[j] + bias.data()[j];
            }
        }
        let (x, gn, bs) = (self.clone(), gain.clone(), bias.clone());
        Ok(Tensor::from_op(
            "layer_norm",
            self.shape().to_vec(),
            out,
            vec![self.clone(), gain.clone(), bias.clone()],
            move |_, g| {
                let gx = x.requires_grad().then(|| {
                    let mut gx = vec![0.0; g.len()];
                    for r in 0..rows {
                        let xr = &xhat[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let dy: Vec<f64> = gr.iter().zip(gn.data()).map(|(a, b)| a * b).collect();
                        let mean_dy = dy.iter().sum::<f64>() / d as f64;
                        let mean_dy_x =
                            dy.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            gx[r * d + j] = rstd[r] * (dy[j] - mean_dy - xr[j] * mean_dy_x);
                        }
                    }
                    gx
                });
                let ggain = gn.requires_grad().then(|| {
                    let mut gg = vec![0.0; d];
                    for (gr, xr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * xr[j];
                        }
                    }
                    gg
                });
                let gbias = bs.requires_grad().then(|| {
                    let mut gb = vec![0.0; d];
                    for gr in g.chunks(d) {
                        gb.iter_mut().zip(gr).for_each(|(a, b)| *a += b);
                    }
                    gb
                });
                vec![gx, ggain, gbias]
            },
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Tensor {
        let x = self.clone();
        let out = self
            .data()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
            .collect();
        Tensor::from_op(
            "gelu",
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            move |_, g| {
                vec![Some(
                    g.iter()
                        .zip(x.data())
                        .map(|(gi, &v)| {
                            let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                            let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                            gi * (0.5 * (1.0 + t) + 0.5 * v * dt)
                        })
                        .collect(),
                )]
            },
        )
    }

    /// Inverted dropout. Identity when `train` is false; otherwise each
    /// element is zeroed with probability `rate` and survivors are scaled
    /// by `1 / (1 - rate)`.
    pub fn dropout<R: Rng + ?Sized>(&self, rate: f64, train: bool, rng: &mut R) -> Result<Tensor> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        if !train || rate == 0.0 {
            return Ok(self.clone());
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.numel())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let out = self.data().iter().zip(&mask).map(|(a, b)| a * b).collect();
        Ok(Tensor::from_op(
            "dropout",
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            move |_, g| vec![Some(g.iter().zip(&mask).map(|(a, b)| a * b).collect())],
        ))
    }
}
