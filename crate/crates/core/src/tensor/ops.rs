use super::{numel, record_zero_norm, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
}

impl Tensor {
    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, Binary::Add)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, Binary::Sub)
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, Binary::Mul)
    }

    /// Same-shape elementwise op; a single-element operand broadcasts.
    fn binary(&self, rhs: &Tensor, kind: Binary) -> Result<Tensor> {
        let (na, nb) = (self.numel(), rhs.numel());
        let shape = if self.shape() == rhs.shape() || nb == 1 {
            self.shape().to_vec()
        } else if na == 1 {
            rhs.shape().to_vec()
        } else {
            let op = match kind {
                Binary::Add => "add",
                Binary::Sub => "sub",
                Binary::Mul => "mul",
            };
            return Err(Error::shape(op, self.shape(), rhs.shape()));
        };
        let n = numel(&shape);
        let (a, b) = (self.clone(), rhs.clone());
        let ai = move |i: usize| if na == 1 { 0 } else { i };
        let bi = move |i: usize| if nb == 1 { 0 } else { i };
        let out: Vec<f64> = (0..n)
            .map(|i| {
                let (x, y) = (a.data()[ai(i)], b.data()[bi(i)]);
                match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                }
            })
            .collect();
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        };
        Ok(Tensor::from_op(
            name,
            shape,
            out,
            vec![self.clone(), rhs.clone()],
            move |_, g| {
                let ga = a.requires_grad().then(|| {
                    let mut ga = vec![0.0; na];
                    for (i, gi) in g.iter().enumerate() {
                        let d = match kind {
                            Binary::Add | Binary::Sub => *gi,
                            Binary::Mul => gi * b.data()[bi(i)],
                        };
                        ga[ai(i)] += d;
                    }
                    ga
                });
                let gb = b.requires_grad().then(|| {
                    let mut gb = vec![0.0; nb];
                    for (i, gi) in g.iter().enumerate() {
                        let d = match kind {
                            Binary::Add => *gi,
                            Binary::Sub => -gi,
                            Binary::Mul => gi * a.data()[ai(i)],
                        };
                        gb[bi(i)] += d;
                    }
                    gb
                });
                vec![ga, gb]
            },
        ))
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        let out = self.data().iter().map(|v| v * factor).collect();
        Tensor::from_op(
            "scale",
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            move |_, g| vec![Some(g.iter().map(|v| v * factor).collect())],
        )
    }

    pub fn add_scalar(&self, value: f64) -> Tensor {
        let out = self.data().iter().map(|v| v + value).collect();
        Tensor::from_op(
            "add_scalar",
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            move |_, g| vec![Some(g.to_vec())],
        )
    }

    pub fn relu(&self) -> Tensor {
        let x = self.clone();
        let out = self.data().iter().map(|v| v.max(0.0)).collect();
        Tensor::from_op(
            "relu",
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            move |_, g| {
                vec![Some(
                    g.iter()
                        .zip(x.data())
                        .map(|(gi, xi)| if *xi > 0.0 { *gi } else { 0.0 })
                        .collect(),
                )]
            },
        )
    }

    pub fn sigmoid(&self) -> Tensor {
        let out = self.data().iter().map(|&v| sigmoid(v)).collect();
        Tensor::from_op(
            "sigmoid",
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            move |y, g| {
                vec![Some(
                    g.iter().zip(y).map(|(gi, yi)| gi * yi * (1.0 - yi)).collect(),
                )]
            },
        )
    }

    pub fn sum(&self) -> Tensor {
        let n = self.numel();
        Tensor::from_op(
            "sum",
            Vec::new(),
            vec![self.data().iter().sum()],
            vec![self.clone()],
            move |_, g| vec![Some(vec![g[0]; n])],
        )
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel();
        let inv = 1.0 / n as f64;
        Tensor::from_op(
            "mean",
            Vec::new(),
            vec![self.data().iter().sum::<f64>() * inv],
            vec![self.clone()],
            move |_, g| vec![Some(vec![g[0] * inv; n])],
        )
    }

    /// Euclidean norm over all elements. The gradient at the origin is
    /// taken as zero.
    pub fn l2_norm(&self) -> Tensor {
        let x = self.clone();
        let norm = self.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        Tensor::from_op(
            "l2_norm",
            Vec::new(),
            vec![norm],
            vec![self.clone()],
            move |_, g| {
                let scale = if norm > 0.0 { g[0] / norm } else { 0.0 };
                vec![Some(x.data().iter().map(|v| v * scale).collect())]
            },
        )
    }

    /// Cosine similarity of two equally sized tensors viewed as vectors.
    /// A zero-norm operand yields 0 and is counted in
    /// [`super::zero_norm_events`].
    pub fn cosine_similarity(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.numel() != rhs.numel() {
            return Err(Error::shape("cosine_similarity", self.shape(), rhs.shape()));
        }
        let a = self.reshape(&[1, self.numel()])?.normalize_rows()?;
        let b = rhs.reshape(&[1, rhs.numel()])?.normalize_rows()?;
        Ok(a.mul(&b)?.sum())
    }

    /// Scales each row of a 2-D tensor to unit length; zero rows stay zero.
    pub fn normalize_rows(&self) -> Result<Tensor> {
        let (m, n) = self.dims2("normalize_rows")?;
        let mut out = self.data().to_vec();
        let mut inv_norms = vec![0.0; m];
        for (row, inv) in out.chunks_mut(n).zip(inv_norms.iter_mut()) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-12 {
                *inv = 1.0 / norm;
                row.iter_mut().for_each(|v| *v *= *inv);
            } else {
                record_zero_norm();
                row.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        Ok(Tensor::from_op(
            "normalize_rows",
            vec![m, n],
            out,
            vec![self.clone()],
            move |y, g| {
                let mut gx = vec![0.0; m * n];
                for i in 0..m {
                    let inv = inv_norms[i];
                    if inv == 0.0 {
                        continue;
                    }
                    let (yr, gr) = (&y[i * n..(i + 1) * n], &g[i * n..(i + 1) * n]);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        gx[i * n + j] = (gr[j] - yr[j] * dot) * inv;
                    }
                }
                vec![Some(gx)]
            },
        ))
    }

    /// Row-wise maximum of a 2-D tensor; the gradient goes to the first
    /// maximal entry of each row.
    pub fn row_max(&self) -> Result<Tensor> {
        let (m, n) = self.dims2("row_max")?;
        let mut arg = vec![0usize; m];
        let out = self
            .data()
            .chunks(n)
            .zip(arg.iter_mut())
            .map(|(row, a)| {
                let mut best = 0;
                for j in 1..n {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                *a = best;
                row[best]
            })
            .collect();
        Ok(Tensor::from_op(
            "row_max",
            vec![m],
            out,
            vec![self.clone()],
            move |_, g| {
                let mut gx = vec![0.0; m * n];
                for i in 0..m {
                    gx[i * n + arg[i]] = g[i];
                }
                vec![Some(gx)]
            },
        ))
    }

    pub fn row_mean(&self) -> Result<Tensor> {
        let (m, n) = self.dims2("row_mean")?;
        let inv = 1.0 / n as f64;
        let out = self.data().chunks(n).map(|r| r.iter().sum::<f64>() * inv).collect();
        Ok(Tensor::from_op(
            "row_mean",
            vec![m],
            out,
            vec![self.clone()],
            move |_, g| {
                let mut gx = vec![0.0; m * n];
                for i in 0..m {
                    gx[i * n..(i + 1) * n].iter_mut().for_each(|v| *v = g[i] * inv);
                }
                vec![Some(gx)]
            },
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() || shape.contains(&0) {
            return Err(Error::shape("reshape", self.shape(), shape));
        }
        Ok(Tensor::from_op(
            "reshape",
            shape.to_vec(),
            self.data().to_vec(),
            vec![self.clone()],
            move |_, g| vec![Some(g.to_vec())],
        ))
    }

    /// Rows `start..start + len` of a 2-D tensor.
    pub fn rows(&self, start: usize, len: usize) -> Result<Tensor> {
        let (m, n) = self.dims2("rows")?;
        if len == 0 || start + len > m {
            return Err(Error::InvalidArgument(format!(
                "rows {start}..{} out of range for {m} rows",
                start + len
            )));
        }
        let out = self.data()[start * n..(start + len) * n].to_vec();
        Ok(Tensor::from_op(
            "rows",
            vec![len, n],
            out,
            vec![self.clone()],
            move |_, g| {
                let mut gx = vec![0.0; m * n];
                gx[start * n..(start + len) * n].copy_from_slice(g);
                vec![Some(gx)]
            },
        ))
    }

    /// Row `i` of a 2-D tensor as a 1-D tensor.
    pub fn row(&self, i: usize) -> Result<Tensor> {
        let (_, n) = self.dims2("row")?;
        self.rows(i, 1)?.reshape(&[n])
    }

    /// Columns `start..start + len` of a 2-D tensor.
    pub fn cols(&self, start: usize, len: usize) -> Result<Tensor> {
        let (m, n) = self.dims2("cols")?;
        if len == 0 || start + len > n {
            return Err(Error::InvalidArgument(format!(
                "cols {start}..{} out of range for {n} columns",
                start + len
            )));
        }
        let mut out = Vec::with_capacity(m * len);
        for r in self.data().chunks(n) {
            out.extend_from_slice(&r[start..start + len]);
        }
        Ok(Tensor::from_op(
            "cols",
            vec![m, len],
            out,
            vec![self.clone()],
            move |_, g| {
                let mut gx = vec![0.0; m * n];
                for i in 0..m {
                    gx[i * n + start..i * n + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                vec![Some(gx)]
            },
        ))
    }

    /// Stacks 2-D tensors with equal column counts vertically.
    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat_rows of nothing".into()))?;
        let (_, n) = first.dims2("concat_rows")?;
        let mut counts = Vec::with_capacity(parts.len());
        for p in parts {
            let (m, n2) = p.dims2("concat_rows")?;
            if n2 != n {
                return Err(Error::shape("concat_rows", first.shape(), p.shape()));
            }
            counts.push(m);
        }
        let total: usize = counts.iter().sum();
        let mut out = Vec::with_capacity(total * n);
        for p in parts {
            out.extend_from_slice(p.data());
        }
        Ok(Tensor::from_op(
            "concat_rows",
            vec![total, n],
            out,
            parts.to_vec(),
            move |_, g| {
                let mut offset = 0;
                counts
                    .iter()
                    .map(|&m| {
                        let piece = g[offset..offset + m * n].to_vec();
                        offset += m * n;
                        Some(piece)
                    })
                    .collect()
            },
        ))
    }

    /// Places 2-D tensors with equal row counts side by side.
    pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat_cols of nothing".into()))?;
        let (m, _) = first.dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (m2, w) = p.dims2("concat_cols")?;
            if m2 != m {
                return Err(Error::shape("concat_cols", first.shape(), p.shape()));
            }
            widths.push(w);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&p.data()[i * w..(i + 1) * w]);
            }
        }
        Ok(Tensor::from_op(
            "concat_cols",
            vec![m, total],
            out,
            parts.to_vec(),
            move |_, g| {
                let mut grads: Vec<Vec<f64>> = widths.iter().map(|w| Vec::with_capacity(m * w)).collect();
                for i in 0..m {
                    let mut off = i * total;
                    for (gp, &w) in grads.iter_mut().zip(&widths) {
                        gp.extend_from_slice(&g[off..off + w]);
                        off += w;
                    }
                }
                grads.into_iter().map(Some).collect()
            },
        ))
    }

    /// Collects single-element tensors into a 1-D tensor.
    pub fn stack_scalars(parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("stack of nothing".into()));
        }
        if let Some(p) = parts.iter().find(|p| p.numel() != 1) {
            return Err(Error::shape("stack_scalars", p.shape(), &[1]));
        }
        let out = parts.iter().map(|p| p.data()[0]).collect();
        Ok(Tensor::from_op(
            "stack_scalars",
            vec![parts.len()],
            out,
            parts.to_vec(),
            move |_, g| g.iter().map(|v| Some(vec![*v])).collect(),
        ))
    }

    /// Adds a length-`n` vector to every row of an `m×n` tensor.
    pub fn add_row(&self, bias: &Tensor) -> Result<Tensor> {
        let (m, n) = self.dims2("add_row")?;
        if bias.shape() != [n] {
            return Err(Error::shape("add_row", self.shape(), bias.shape()));
        }
        let mut out = self.data().to_vec();
        for row in out.chunks_mut(n) {
            row.iter_mut().zip(bias.data()).for_each(|(a, b)| *a += b);
        }
        Ok(Tensor::from_op(
            "add_row",
            vec![m, n],
            out,
            vec![self.clone(), bias.clone()],
            move |_, g| {
                let mut gb = vec![0.0; n];
                for row in g.chunks(n) {
                    gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                vec![Some(g.to_vec()), Some(gb)]
            },
        ))
    }

    /// Rows of a `v×d` table selected by `ids`, as an `ids.len()×d` tensor.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Tensor> {
        let (v, d) = self.dims2("gather_rows")?;
        if ids.is_empty() {
            return Err(Error::InvalidArgument("gather_rows with no ids".into()));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::InvalidArgument(format!(
                "id {bad} out of range for table with {v} rows"
            )));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&self.data()[i * d..(i + 1) * d]);
        }
        let ids = ids.to_vec();
        Ok(Tensor::from_op(
            "gather_rows",
            vec![ids.len(), d],
            out,
            vec![self.clone()],
            move |_, g| {
                let mut gt = vec![0.0; v * d];
                for (r, &i) in ids.iter().enumerate() {
                    gt[i * d..(i + 1) * d]
                        .iter_mut()
                        .zip(&g[r * d..(r + 1) * d])
                        .for_each(|(a, b)| *a += b);
                }
                vec![Some(gt)]
            },
        ))
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_of_zero() {
        assert_eq!(Tensor::scalar(0.0).sigmoid().item(), 0.5);
        assert!(sigmoid(-800.0) > 0.0 || sigmoid(-800.0) == 0.0);
        assert!(sigmoid(800.0) <= 1.0);
    }

    #[test]
    fn cosine_self_is_one() {
        let v = Tensor::new(&[5], vec![0.3, -2.0, 1.5, 0.0, 7.0]).unwrap();
        assert!((v.cosine_similarity(&v).unwrap().item() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn cosine_zero_vector_counts_event() {
        let before = crate::tensor::zero_norm_events();
        let z = Tensor::zeros(&[3]);
        let v = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(v.cosine_similarity(&z).unwrap().item(), 0.0);
        assert!(crate::tensor::zero_norm_events() > before);
    }

    #[test]
    fn scalar_broadcast_only() {
        let a = Tensor::new(&[2, 2], vec![1., 2., 3., 4.]).unwrap();
        let s = Tensor::scalar(10.0);
        assert_eq!(a.add(&s).unwrap().data(), &[11., 12., 13., 14.]);
        assert_eq!(s.sub(&a).unwrap().data(), &[9., 8., 7., 6.]);
        let row = Tensor::new(&[2], vec![1., 1.]).unwrap();
        assert!(a.add(&row).is_err());
    }

    #[test]
    fn broadcast_gradient_sums() {
        let a = Tensor::param(&[3], vec![1., 2., 3.]).unwrap();
        let s = Tensor::param(&[], vec![2.0]).unwrap();
        a.mul(&s).unwrap().sum().backward().unwrap();
        assert_eq!(s.grad().unwrap(), vec![6.0]);
        assert_eq!(a.grad().unwrap(), vec![2.0; 3]);
    }

    #[test]
    fn concat_and_slice_are_inverse() {
        let a = Tensor::new(&[1, 3], vec![1., 2., 3.]).unwrap();
        let b = Tensor::new(&[2, 3], vec![4., 5., 6., 7., 8., 9.]).unwrap();
        let c = Tensor::concat_rows(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(c.rows(1, 2).unwrap().data(), b.data());
        let d = Tensor::concat_cols(&[b.cols(0, 1).unwrap(), b.cols(1, 2).unwrap()]).unwrap();
        assert_eq!(d.data(), b.data());
    }

    #[test]
    fn gather_out_of_range() {
        let t = Tensor::zeros(&[4, 2]);
        assert!(t.gather_rows(&[4]).is_err());
        assert_eq!(t.gather_rows(&[0, 3, 3]).unwrap().shape(), &[3, 2]);
    }
}
