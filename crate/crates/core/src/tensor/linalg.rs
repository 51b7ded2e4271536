use super::Tensor;
use crate::error::{Error, Result};

/// `c = alpha * op(a) * op(b) + beta * c` where `op` optionally transposes.
/// `a` is stored row-major as `m×k` (or `k×m` when `ta`), `b` as `k×n`
/// (or `n×k` when `tb`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slice lengths are checked above and the strides describe
    // exactly those row-major buffers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Tensor {
    /// Matrix product `self × rhs` for 2-D operands.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = rhs.dims2("matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(), rhs.shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(), false, rhs.data(), false, 0.0, &mut out);
        let (a, b) = (self.clone(), rhs.clone());
        Ok(Tensor::from_op(
            "matmul",
            vec![m, n],
            out,
            vec![self.clone(), rhs.clone()],
            move |_, g| {
                let ga = a.requires_grad().then(|| {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g, false, b.data(), true, 0.0, &mut ga);
                    ga
                });
                let gb = b.requires_grad().then(|| {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, a.data(), true, g, false, 0.0, &mut gb);
                    gb
                });
                vec![ga, gb]
            },
        ))
    }

    /// `self × rhsᵀ` without materialising the transpose.
    pub fn matmul_t(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2("matmul_t")?;
        let (n, k2) = rhs.dims2("matmul_t")?;
        if k != k2 {
            return Err(Error::shape("matmul_t", self.shape(), rhs.shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(), false, rhs.data(), true, 0.0, &mut out);
        let (a, b) = (self.clone(), rhs.clone());
        Ok(Tensor::from_op(
            "matmul_t",
            vec![m, n],
            out,
            vec![self.clone(), rhs.clone()],
            move |_, g| {
                let ga = a.requires_grad().then(|| {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g, false, b.data(), false, 0.0, &mut ga);
                    ga
                });
                let gb = b.requires_grad().then(|| {
                    let mut gb = vec![0.0; n * k];
                    gemm(n, m, k, g, true, a.data(), false, 0.0, &mut gb);
                    gb
                });
                vec![ga, gb]
            },
        ))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.dims2("transpose")?;
        let out = transpose_buf(self.data(), m, n);
        Ok(Tensor::from_op(
            "transpose",
            vec![n, m],
            out,
            vec![self.clone()],
            move |_, g| vec![Some(transpose_buf(g, n, m))],
        ))
    }
}

pub(crate) fn transpose_buf(src: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = src[i * n + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_times_matrix() {
        let eye = Tensor::new(&[3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let m = Tensor::new(&[3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(eye.matmul(&m).unwrap().data(), m.data());
    }

    #[test]
    fn hand_sum() {
        let a = Tensor::new(&[2, 2], vec![1., 2., 3., 4.]).unwrap();
        let b = Tensor::new(&[2, 1], vec![1., 1.]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[3., 7.]);
    }

    #[test]
    fn mismatch_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn matmul_t_agrees_with_explicit_transpose() {
        let a = Tensor::new(&[2, 3], vec![1., -2., 0.5, 3., 1., -1.]).unwrap();
        let b = Tensor::new(&[4, 3], (0..12).map(|v| v as f64 * 0.3 - 1.0).collect()).unwrap();
        let lhs = a.matmul_t(&b).unwrap();
        let rhs = a.matmul(&b.transpose().unwrap()).unwrap();
        for (x, y) in lhs.data().iter().zip(rhs.data()) {
            assert!((x - y).abs() < 1e-14);
        }
    }
}
