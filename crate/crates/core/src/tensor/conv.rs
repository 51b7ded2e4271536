use super::linalg::gemm;
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dSpec {
    pub fn output_size(&self, input: usize, kernel: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        (self.stride > 0 && padded >= kernel).then(|| (padded - kernel) / self.stride + 1)
    }
}

struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    /// Maps column entry (channel, ky, kx, oy, ox) to an input offset.
    fn source(&self, ch: usize, ky: usize, kx: usize, oy: usize, ox: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky).checked_sub(self.pad)?;
        let ix = (ox * self.stride + kx).checked_sub(self.pad)?;
        (iy < self.h && ix < self.w).then(|| (ch * self.h + iy) * self.w + ix)
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let (kk, p) = (self.k * self.k, self.ho * self.wo);
        let mut cols = vec![0.0; self.c * kk * p];
        for ch in 0..self.c {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ch * kk + ky * self.k + kx) * p;
                    for oy in 0..self.ho {
                        for ox in 0..self.wo {
                            if let Some(src) = self.source(ch, ky, kx, oy, ox) {
                                cols[row + oy * self.wo + ox] = x[src];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let (kk, p) = (self.k * self.k, self.ho * self.wo);
        let mut x = vec![0.0; self.c * self.h * self.w];
        for ch in 0..self.c {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ch * kk + ky * self.k + kx) * p;
                    for oy in 0..self.ho {
                        for ox in 0..self.wo {
                            if let Some(dst) = self.source(ch, ky, kx, oy, ox) {
                                x[dst] += cols[row + oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
        x
    }
}

impl Tensor {
    /// 2-D convolution of a `c×h×w` input with `o×c×k×k` weights and a
    /// length-`o` bias, producing `o×ho×wo`.
    pub fn conv2d(&self, weight: &Tensor, bias: &Tensor, spec: Conv2dSpec) -> Result<Tensor> {
        let [c, h, w] = *self.shape() else {
            return Err(Error::InvalidArgument(format!(
                "conv2d expects a c×h×w input, got {:?}",
                self.shape()
            )));
        };
        let [o, c2, k, k2] = *weight.shape() else {
            return Err(Error::shape("conv2d", self.shape(), weight.shape()));
        };
        if c2 != c || k != k2 {
            return Err(Error::shape("conv2d", self.shape(), weight.shape()));
        }
        if bias.shape() != [o] {
            return Err(Error::shape("conv2d", weight.shape(), bias.shape()));
        }
        let (Some(ho), Some(wo)) = (spec.output_size(h, k), spec.output_size(w, k)) else {
            return Err(Error::InvalidArgument(format!(
                "conv2d kernel {k} with {spec:?} does not fit a {h}×{w} input"
            )));
        };
        let geo = Geometry {
            c,
            h,
            w,
            k,
            ho,
            wo,
            stride: spec.stride,
            pad: spec.padding,
        };
        let ckk = c * k * k;
        let p = ho * wo;
        let cols = geo.im2col(self.data());
        let mut out = vec![0.0; o * p];
        for (row, b) in out.chunks_mut(p).zip(bias.data()) {
            row.iter_mut().for_each(|v| *v = *b);
        }
        gemm(o, ckk, p, weight.data(), false, &cols, false, 1.0, &mut out);

        let (x, wt, bs) = (self.clone(), weight.clone(), bias.clone());
        Ok(Tensor::from_op(
            "conv2d",
            vec![o, ho, wo],
            out,
            vec![self.clone(), weight.clone(), bias.clone()],
            move |_, g| {
                let gx = x.requires_grad().then(|| {
                    let mut gcols = vec![0.0; ckk * p];
                    gemm(ckk, o, p, wt.data(), true, g, false, 0.0, &mut gcols);
                    geo.col2im(&gcols)
                });
                let gw = wt.requires_grad().then(|| {
                    let mut gw = vec![0.0; o * ckk];
                    gemm(o, p, ckk, g, false, &cols, true, 0.0, &mut gw);
                    gw
                });
                let gb = bs
                    .requires_grad()
                    .then(|| g.chunks(p).map(|r| r.iter().sum()).collect());
                vec![gx, gw, gb]
            },
        ))
    }
}
