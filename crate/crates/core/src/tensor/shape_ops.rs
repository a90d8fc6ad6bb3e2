use super::linalg::softmax_in_place;
use super::{Tensor, Var};
use crate::error::{Error, Result};

/// Splits `shape` around `axis` into (outer, len, inner) extents.
fn around(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<'t> Var<'t> {
    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let shape = shape.into();
        let x = self.value();
        if shape.iter().product::<usize>() != x.numel() {
            return Err(Error::shape("reshape", &[x.shape(), &shape]));
        }
        let value = Tensor::from_parts(shape, x.data().to_vec());
        Ok(self.tape.record(value, &[self], |g, _| vec![Some(g.to_vec())]))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(self, axes: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::invalid(
                "permute",
                format!("axes {axes:?} are not a permutation of rank {rank}"),
            ));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let in_strides = Tensor::strides(shape);
        // Input stride for each output axis.
        let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let index = permuted_offsets(&out_shape, &src_strides);
        let data: Vec<f64> = index.iter().map(|&i| x.data()[i]).collect();
        let n = data.len();
        let value = Tensor::from_parts(out_shape, data);
        Ok(self.tape.record(value, &[self], move |g, _| {
            let mut gx = vec![0.0; n];
            for (o, &i) in index.iter().enumerate() {
                gx[i] = g[o];
            }
            vec![Some(gx)]
        }))
    }

    /// Swaps the two axes of a matrix.
    pub fn t(self) -> Result<Var<'t>> {
        if self.shape().len() != 2 {
            return Err(Error::shape("transpose", &[&self.shape()]));
        }
        self.permute(&[1, 0])
    }

    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return Err(Error::invalid("concat", format!("axis {axis} out of range")));
        }
        for v in &values {
            let s = v.shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                let shapes: Vec<&[usize]> = values.iter().map(|v| v.shape()).collect();
                return Err(Error::shape("concat", &shapes));
            }
        }
        let lens: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let (outer, _, inner) = around(&base, axis);
        let mut shape = base.clone();
        shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &len) in values.iter().zip(&lens) {
                data.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let value = Tensor::from_parts(shape, data);
        Ok(first.tape.record(value, parts, move |g, needs| {
            let mut grads: Vec<Option<Vec<f64>>> = lens
                .iter()
                .zip(needs)
                .map(|(&len, &need)| need.then(|| Vec::with_capacity(outer * len * inner)))
                .collect();
            for o in 0..outer {
                let mut off = o * total * inner;
                for (slot, &len) in grads.iter_mut().zip(&lens) {
                    if let Some(buf) = slot {
                        buf.extend_from_slice(&g[off..off + len * inner]);
                    }
                    off += len * inner;
                }
            }
            grads
        }))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::invalid(
                "narrow",
                format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, full, inner) = around(&shape, axis);
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let n = x.numel();
        let value = Tensor::from_parts(out_shape, data);
        Ok(self.tape.record(value, &[self], move |g, _| {
            let mut gx = vec![0.0; n];
            for o in 0..outer {
                let base = (o * full + start) * inner;
                gx[base..base + len * inner]
                    .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(gx)]
        }))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(self) -> Var<'t> {
        let x = self.value();
        let n = x.numel();
        let value = Tensor::scalar(x.data().iter().sum());
        self.tape
            .record(value, &[self], move |g, _| vec![Some(vec![g[0]; n])])
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.numel().max(1);
        self.sum().scale(1.0 / n as f64)
    }

    /// Sums out `axis`.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid("sum_axis", format!("axis {axis} of {shape:?}")));
        }
        let (outer, len, inner) = around(&shape, axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &x.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
                data[o * inner..(o + 1) * inner]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(d, s)| *d += s);
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let value = Tensor::from_parts(out_shape, data);
        Ok(self.tape.record(value, &[self], move |g, _| {
            let mut gx = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                for _ in 0..len {
                    gx.extend_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(gx)]
        }))
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>> {
        let len = *self
            .shape()
            .get(axis)
            .ok_or_else(|| Error::invalid("mean_axis", format!("axis {axis}")))?;
        Ok(self.sum_axis(axis)?.scale(1.0 / len.max(1) as f64))
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let Some(&last) = shape.last() else {
            return Err(Error::shape("softmax", &[&shape]));
        };
        let mut data = x.data().to_vec();
        if last > 0 {
            data.chunks_mut(last).for_each(softmax_in_place);
        }
        let y = std::rc::Rc::new(Tensor::from_parts(shape, data));
        let y2 = std::rc::Rc::clone(&y);
        Ok(self.tape.record_rc(y, &[self], move |g, _| {
            let mut gx = Vec::with_capacity(g.len());
            for (gr, yr) in g.chunks(last).zip(y2.data().chunks(last)) {
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                gx.extend(gr.iter().zip(yr).map(|(a, b)| b * (a - dot)));
            }
            vec![Some(gx)]
        }))
    }
}

/// Source offset of every output element for a strided gather.
fn permuted_offsets(out_shape: &[usize], src_strides: &[usize]) -> Vec<usize> {
    let n: usize = out_shape.iter().product();
    let rank = out_shape.len();
    let mut index = Vec::with_capacity(n);
    let mut counter = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        index.push(off);
        for d in (0..rank).rev() {
            counter[d] += 1;
            off += src_strides[d];
            if counter[d] < out_shape[d] {
                break;
            }
            off -= counter[d] * src_strides[d];
            counter[d] = 0;
        }
    }
    index
}
