use std::rc::Rc;

use super::{Tensor, Var};
use crate::error::{Error, Result};

/// Row-major matrix view: `rows × cols` with an optional transpose.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a> Mat<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Mat {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    pub fn t(self) -> Self {
        Mat {
            transposed: !self.transposed,
            ..self
        }
    }

    /// Logical shape after the transpose flag.
    fn dims(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `out = beta·out + a·b` where `out` is a row-major `m × n` buffer.
pub(crate) fn gemm(a: Mat<'_>, b: Mat<'_>, beta: f64, out: &mut [f64]) {
    let (m, k) = a.dims();
    let (k2, n) = b.dims();
    assert_eq!(k, k2, "gemm inner dimensions");
    assert_eq!(out.len(), m * n, "gemm output size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        out.iter_mut().for_each(|x| *x *= beta);
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: strides and dimensions describe in-bounds views of the slices
    // checked above; `out` is exclusively borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn matmul_new(a: Mat<'_>, b: Mat<'_>) -> Vec<f64> {
    let m = a.dims().0;
    let n = b.dims().1;
    let mut out = vec![0.0; m * n];
    gemm(a, b, 0.0, &mut out);
    out
}

impl<'t> Var<'t> {
    /// `[m, k] × [k, n] → [m, n]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", &[sa, sb]));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_new(Mat::new(a.data(), m, k), Mat::new(b.data(), k, n));
        let value = Tensor::from_parts(vec![m, n], out);
        Ok(self.tape.record(value, &[self, other], move |g, needs| {
            let gm = Mat::new(g, m, n);
            let ga = needs[0].then(|| matmul_new(gm, Mat::new(b.data(), k, n).t()));
            let gb = needs[1].then(|| matmul_new(Mat::new(a.data(), m, k).t(), gm));
            vec![ga, gb]
        }))
    }

    /// Fused scaled dot-product attention `softmax(Q Kᵀ / √d) V`.
    ///
    /// `q: [n, d]`, `k: [m, d]`, `v: [m, e]` → `[n, e]`.
    pub fn attention(self, k: Var<'t>, v: Var<'t>) -> Result<Var<'t>> {
        let (qv, kv, vv) = (self.value(), k.value(), v.value());
        let (sq, sk, sv) = (qv.shape(), kv.shape(), vv.shape());
        if sq.len() != 2 || sk.len() != 2 || sv.len() != 2 || sq[1] != sk[1] || sk[0] != sv[0] {
            return Err(Error::shape("attention", &[sq, sk, sv]));
        }
        let (n, d, m, e) = (sq[0], sq[1], sk[0], sv[1]);
        let scale = 1.0 / (d as f64).sqrt();
        let mut probs = matmul_new(Mat::new(qv.data(), n, d), Mat::new(kv.data(), m, d).t());
        for row in probs.chunks_mut(m.max(1)) {
            row.iter_mut().for_each(|s| *s *= scale);
            softmax_in_place(row);
        }
        let out = matmul_new(Mat::new(&probs, n, m), Mat::new(vv.data(), m, e));
        let value = Tensor::from_parts(vec![n, e], out);
        let probs = Rc::new(probs);
        Ok(self.tape.record(value, &[self, k, v], move |g, needs| {
            let gm = Mat::new(g, n, e);
            let p = Mat::new(&probs, n, m);
            let gv = needs[2].then(|| matmul_new(p.t(), gm));
            if !needs[0] && !needs[1] {
                return vec![None, None, gv];
            }
            // dS = P ⊙ (dP − rowsum(dP ⊙ P)), scaled by 1/√d.
            let mut ds = matmul_new(gm, Mat::new(vv.data(), m, e).t());
            for (row_ds, row_p) in ds.chunks_mut(m.max(1)).zip(probs.chunks(m.max(1))) {
                let dot: f64 = row_ds.iter().zip(row_p).map(|(a, b)| a * b).sum();
                for (x, &pv) in row_ds.iter_mut().zip(row_p) {
                    *x = pv * (*x - dot) * scale;
                }
            }
            let dsm = Mat::new(&ds, n, m);
            let gq = needs[0].then(|| matmul_new(dsm, Mat::new(kv.data(), m, d)));
            let gk = needs[1].then(|| matmul_new(dsm.t(), Mat::new(qv.data(), n, d)));
            vec![gq, gk, gv]
        }))
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    row.iter_mut().for_each(|x| *x /= total);
}
